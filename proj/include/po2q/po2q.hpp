#pragma once

// Convenience header pulling in the whole library.

#include "po2q/core_quant.hpp"
#include "po2q/error.hpp"
#include "po2q/fpsim.hpp"
#include "po2q/grad_quant.hpp"
#include "po2q/metrics.hpp"
#include "po2q/msqe_opt.hpp"
#include "po2q/optim.hpp"
#include "po2q/qat.hpp"
#include "po2q/rng.hpp"
#include "po2q/tensor.hpp"
#include "po2q/tensor_io.hpp"
#include "po2q/toy_experiments.hpp"
