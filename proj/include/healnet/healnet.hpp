#pragma once

#include "healnet/error.hpp"
#include "healnet/tensor.hpp"
#include "healnet/rng.hpp"
#include "healnet/ops.hpp"
#include "healnet/gradcheck.hpp"
#include "healnet/fusion.hpp"
#include "healnet/survival.hpp"
#include "healnet/data.hpp"
#include "healnet/checkpoint.hpp"
#include "healnet/training.hpp"
#include "healnet/run_config.hpp"
#include "healnet/evaluation.hpp"
#include "healnet/gradcheck_suite.hpp"
