#pragma once

#include "coopertrim/error.hpp"
#include "coopertrim/rng.hpp"
#include "coopertrim/feature_grid.hpp"
#include "coopertrim/uncertainty.hpp"
#include "coopertrim/relevance.hpp"
#include "coopertrim/protocol.hpp"
#include "coopertrim/netsim.hpp"
#include "coopertrim/model.hpp"
#include "coopertrim/training.hpp"
#include "coopertrim/scenario.hpp"
#include "coopertrim/harness.hpp"
#include "coopertrim/experiments.hpp"
#include "coopertrim/config.hpp"
#include "coopertrim/self_check.hpp"
