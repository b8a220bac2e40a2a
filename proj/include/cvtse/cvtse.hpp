#pragma once

#include "cvtse/errors.hpp"
#include "cvtse/estimator.hpp"
#include "cvtse/kalman.hpp"
#include "cvtse/ltv_model.hpp"
#include "cvtse/measurement.hpp"
#include "cvtse/metrics.hpp"
#include "cvtse/network.hpp"
#include "cvtse/pipeline.hpp"
#include "cvtse/seed.hpp"
#include "cvtse/sensing.hpp"
#include "cvtse/simulate.hpp"
