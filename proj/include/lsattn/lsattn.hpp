#pragma once

#include "lsattn/tensor.hpp"
#include "lsattn/autodiff.hpp"
#include "lsattn/config.hpp"
#include "lsattn/params.hpp"
#include "lsattn/attention.hpp"
#include "lsattn/causal.hpp"
#include "lsattn/probe.hpp"
#include "lsattn/flops.hpp"
#include "lsattn/bench.hpp"
#include "lsattn/toy_lm.hpp"
#include "lsattn/checks.hpp"
