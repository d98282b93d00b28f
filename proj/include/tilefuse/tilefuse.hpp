// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "tilefuse/config.hpp"
#include "tilefuse/convnext.hpp"
#include "tilefuse/crop_planner.hpp"
#include "tilefuse/cvfm.hpp"
#include "tilefuse/error.hpp"
#include "tilefuse/hybrid_encoder.hpp"
#include "tilefuse/image_io.hpp"
#include "tilefuse/init.hpp"
#include "tilefuse/ops.hpp"
#include "tilefuse/probe_bench.hpp"
#include "tilefuse/rng.hpp"
#include "tilefuse/tensor.hpp"
