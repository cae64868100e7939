// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "midcot/answer.hpp"
#include "midcot/bindings.hpp"
#include "midcot/dataset.hpp"
#include "midcot/dtype.hpp"
#include "midcot/error.hpp"
#include "midcot/hash.hpp"
#include "midcot/inference.hpp"
#include "midcot/log.hpp"
#include "midcot/merge.hpp"
#include "midcot/metrics.hpp"
#include "midcot/parallel.hpp"
#include "midcot/pipeline.hpp"
#include "midcot/report.hpp"
#include "midcot/tensor_store.hpp"
#include "midcot/tokenizer.hpp"
