// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "delimlab/analysis.hpp"
#include "delimlab/error.hpp"
#include "delimlab/experiment.hpp"
#include "delimlab/intervention.hpp"
#include "delimlab/layout.hpp"
#include "delimlab/model.hpp"
#include "delimlab/rng.hpp"
#include "delimlab/scenario.hpp"
#include "delimlab/tensor.hpp"
#include "delimlab/trace.hpp"
#include "delimlab/trace_io.hpp"
