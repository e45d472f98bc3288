#pragma once

#include "layerdiff/checkpoint.hpp"
#include "layerdiff/config.hpp"
#include "layerdiff/crop.hpp"
#include "layerdiff/data.hpp"
#include "layerdiff/image_io.hpp"
#include "layerdiff/model_config.hpp"
#include "layerdiff/noise.hpp"
#include "layerdiff/numerics/autograd.hpp"
#include "layerdiff/numerics/ops.hpp"
#include "layerdiff/numerics/tensor.hpp"
#include "layerdiff/rng.hpp"
#include "layerdiff/sample.hpp"
#include "layerdiff/schedule.hpp"
#include "layerdiff/train.hpp"
#include "layerdiff/unet.hpp"
