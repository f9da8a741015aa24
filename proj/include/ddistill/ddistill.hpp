// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ddistill/config.hpp"
#include "ddistill/convnet.hpp"
#include "ddistill/data.hpp"
#include "ddistill/datastore.hpp"
#include "ddistill/denoiser.hpp"
#include "ddistill/distillery.hpp"
#include "ddistill/error.hpp"
#include "ddistill/gemm.hpp"
#include "ddistill/kernels.hpp"
#include "ddistill/metrics.hpp"
#include "ddistill/params.hpp"
#include "ddistill/rng.hpp"
#include "ddistill/sampler.hpp"
#include "ddistill/schedule.hpp"
#include "ddistill/tensor.hpp"
#include "ddistill/trainer.hpp"
