// Copyright 2026 The rebasin Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "rebasin/calibration.hpp"
#include "rebasin/corr_stats.hpp"
#include "rebasin/encoder.hpp"
#include "rebasin/error.hpp"
#include "rebasin/eval.hpp"
#include "rebasin/lap.hpp"
#include "rebasin/merger.hpp"
#include "rebasin/plan.hpp"
#include "rebasin/planner.hpp"
#include "rebasin/tensor_store.hpp"
