#pragma once

// Everything except the config, bundle and report layers, which need
// yaml-cpp and OpenSSL.
#include "ddro/baselines.hpp"
#include "ddro/data.hpp"
#include "ddro/diffusion.hpp"
#include "ddro/error.hpp"
#include "ddro/experiment.hpp"
#include "ddro/graph.hpp"
#include "ddro/inner_max.hpp"
#include "ddro/metrics.hpp"
#include "ddro/mlp.hpp"
#include "ddro/optim.hpp"
#include "ddro/predictor.hpp"
#include "ddro/rng.hpp"
#include "ddro/tensor.hpp"
#include "ddro/trainer.hpp"
