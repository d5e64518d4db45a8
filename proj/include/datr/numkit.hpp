#pragma once

#include "datr/numkit/adamw.hpp"
#include "datr/numkit/gradcheck.hpp"
#include "datr/numkit/ops.hpp"
#include "datr/numkit/rng.hpp"
#include "datr/numkit/tensor.hpp"
