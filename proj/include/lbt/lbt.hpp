// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "analyzer.hpp"
#include "bitwidth.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "fixedpoint.hpp"
#include "nn.hpp"
#include "optim.hpp"
#include "qops.hpp"
#include "rops.hpp"
#include "tensor.hpp"
#include "trainer.hpp"
