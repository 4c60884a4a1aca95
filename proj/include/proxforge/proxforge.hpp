#pragma once

#include "tensor.hpp"
#include "linops.hpp"
#include "prox.hpp"
#include "scheme.hpp"
#include "convergence.hpp"
#include "learn.hpp"
#include "bench.hpp"
