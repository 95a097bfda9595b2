/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include "distildoc/enrichment.hpp"
#include "distildoc/geometry.hpp"
#include "distildoc/gradcheck.hpp"
#include "distildoc/io.hpp"
#include "distildoc/kd_losses.hpp"
#include "distildoc/metrics.hpp"
#include "distildoc/probability.hpp"
#include "distildoc/random.hpp"
#include "distildoc/tensor.hpp"
#include "distildoc/tensor_json.hpp"
#include "distildoc/text.hpp"
#include "distildoc/toy_models.hpp"
#include "distildoc/version.hpp"
