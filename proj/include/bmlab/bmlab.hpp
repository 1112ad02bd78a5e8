#pragma once

#include "bmlab/core.hpp"
#include "bmlab/numerics.hpp"
#include "bmlab/forms.hpp"
#include "bmlab/lattice.hpp"
#include "bmlab/arith.hpp"
#include "bmlab/grid.hpp"
#include "bmlab/multiplier.hpp"
#include "bmlab/sparse.hpp"
#include "bmlab/continuous.hpp"
#include "bmlab/checks.hpp"
#include "bmlab/report.hpp"
