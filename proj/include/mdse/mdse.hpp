// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mdse/error.hpp"
#include "mdse/binary_io.hpp"
#include "mdse/fft.hpp"
#include "mdse/wav.hpp"
#include "mdse/dsp.hpp"
#include "mdse/mask.hpp"
#include "mdse/nn.hpp"
#include "mdse/mode.hpp"
#include "mdse/train.hpp"
#include "mdse/pretrain.hpp"
#include "mdse/data.hpp"
#include "mdse/eval.hpp"
#include "mdse/config.hpp"
#include "mdse/pipeline.hpp"
