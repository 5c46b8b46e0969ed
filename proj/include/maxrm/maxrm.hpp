#pragma once

// Umbrella header: regression forests minimizing the maximum empirical risk
// across training environments, with solvers, baselines, data generators,
// and the benchmark harness.

#include "maxrm/baselines.hpp"
#include "maxrm/cart.hpp"
#include "maxrm/csv.hpp"
#include "maxrm/dataset.hpp"
#include "maxrm/dgp.hpp"
#include "maxrm/errors.hpp"
#include "maxrm/experiment.hpp"
#include "maxrm/gp.hpp"
#include "maxrm/log.hpp"
#include "maxrm/metrics.hpp"
#include "maxrm/minimax.hpp"
#include "maxrm/model_io.hpp"
#include "maxrm/parallel.hpp"
#include "maxrm/risk.hpp"
#include "maxrm/rng.hpp"
#include "maxrm/strategies.hpp"
#include "maxrm/svg.hpp"
