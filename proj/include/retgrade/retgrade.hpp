#pragma once

#include "retgrade/checkpoint.hpp"
#include "retgrade/config.hpp"
#include "retgrade/coral.hpp"
#include "retgrade/data.hpp"
#include "retgrade/error.hpp"
#include "retgrade/fusion.hpp"
#include "retgrade/image.hpp"
#include "retgrade/imgproc.hpp"
#include "retgrade/log.hpp"
#include "retgrade/metrics.hpp"
#include "retgrade/model.hpp"
#include "retgrade/nn.hpp"
#include "retgrade/parallel.hpp"
#include "retgrade/pipeline.hpp"
#include "retgrade/random.hpp"
#include "retgrade/synth.hpp"
#include "retgrade/tensor.hpp"
#include "retgrade/train.hpp"
