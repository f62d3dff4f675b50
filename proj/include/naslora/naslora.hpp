// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "naslora/adapter.hpp"
#include "naslora/analysis.hpp"
#include "naslora/checkpoint.hpp"
#include "naslora/config.hpp"
#include "naslora/grad_check.hpp"
#include "naslora/losses.hpp"
#include "naslora/metrics.hpp"
#include "naslora/model.hpp"
#include "naslora/nas_cell.hpp"
#include "naslora/ops.hpp"
#include "naslora/optim.hpp"
#include "naslora/random.hpp"
#include "naslora/synth_data.hpp"
#include "naslora/tensor.hpp"
#include "naslora/train.hpp"
