#pragma once

#include "difsr/errors.hpp"
#include "difsr/numcore/value.hpp"
#include "difsr/numcore/ops.hpp"
#include "difsr/numcore/linalg.hpp"
#include "difsr/numcore/random.hpp"
#include "difsr/dataset/dataset.hpp"
#include "difsr/dataset/cache.hpp"
#include "difsr/model/config.hpp"
#include "difsr/attention/attention.hpp"
#include "difsr/model/model.hpp"
#include "difsr/model/checkpoint.hpp"
#include "difsr/evaluation/evaluate.hpp"
#include "difsr/train/losses.hpp"
#include "difsr/train/adam.hpp"
#include "difsr/train/trainer.hpp"
#include "difsr/diagnostics/diagnostics.hpp"
