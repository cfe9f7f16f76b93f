#pragma once

#include "autoprom/adam.hpp"
#include "autoprom/anchors.hpp"
#include "autoprom/boxes.hpp"
#include "autoprom/config.hpp"
#include "autoprom/data.hpp"
#include "autoprom/decoder.hpp"
#include "autoprom/encoder.hpp"
#include "autoprom/error.hpp"
#include "autoprom/head.hpp"
#include "autoprom/hungarian.hpp"
#include "autoprom/image_io.hpp"
#include "autoprom/layers.hpp"
#include "autoprom/losses.hpp"
#include "autoprom/metrics.hpp"
#include "autoprom/model.hpp"
#include "autoprom/ops.hpp"
#include "autoprom/parameter.hpp"
#include "autoprom/pipeline.hpp"
#include "autoprom/postprocess.hpp"
#include "autoprom/scheduler.hpp"
#include "autoprom/segmentation.hpp"
#include "autoprom/tensor.hpp"
#include "autoprom/tensor_io.hpp"
