#pragma once

#include "ntkmoe/calibration.hpp"
#include "ntkmoe/common.hpp"
#include "ntkmoe/datasets.hpp"
#include "ntkmoe/experiments.hpp"
#include "ntkmoe/gating.hpp"
#include "ntkmoe/gp_expert.hpp"
#include "ntkmoe/metrics.hpp"
#include "ntkmoe/moe_pipeline.hpp"
#include "ntkmoe/nn_core.hpp"
#include "ntkmoe/ntk_features.hpp"
#include "ntkmoe/snapshot.hpp"
