#pragma once

#include "entlab/core.hpp"
#include "entlab/dissipation.hpp"
#include "entlab/entropy.hpp"
#include "entlab/fpe.hpp"
#include "entlab/grid.hpp"
#include "entlab/io.hpp"
#include "entlab/model.hpp"
#include "entlab/reversal.hpp"
#include "entlab/rng.hpp"
#include "entlab/scenario.hpp"
#include "entlab/simulate.hpp"
#include "entlab/transport.hpp"
