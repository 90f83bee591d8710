#pragma once

// Umbrella header.
#include "mitodet/common.hpp"
#include "mitodet/image.hpp"
#include "mitodet/image_io.hpp"
#include "mitodet/dataset.hpp"
#include "mitodet/stain.hpp"
#include "mitodet/synthetic.hpp"
#include "mitodet/augment.hpp"
#include "mitodet/matching.hpp"
#include "mitodet/linear_model.hpp"
#include "mitodet/detection.hpp"
#include "mitodet/ensemble.hpp"
#include "mitodet/fusion.hpp"
#include "mitodet/pipeline.hpp"
