#pragma once

#include "ccbm/checkpoint.hpp"
#include "ccbm/config.hpp"
#include "ccbm/credal.hpp"
#include "ccbm/data.hpp"
#include "ccbm/error.hpp"
#include "ccbm/gradcheck.hpp"
#include "ccbm/losses.hpp"
#include "ccbm/metrics.hpp"
#include "ccbm/model.hpp"
#include "ccbm/parallel.hpp"
#include "ccbm/report.hpp"
#include "ccbm/rng.hpp"
#include "ccbm/synth.hpp"
#include "ccbm/train.hpp"
