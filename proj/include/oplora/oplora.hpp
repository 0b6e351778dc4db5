#pragma once

#include "oplora/adapter_io.hpp"
#include "oplora/appendix.hpp"
#include "oplora/autodiff.hpp"
#include "oplora/config.hpp"
#include "oplora/diagnostics.hpp"
#include "oplora/errors.hpp"
#include "oplora/harness.hpp"
#include "oplora/models.hpp"
#include "oplora/optim.hpp"
#include "oplora/plot.hpp"
#include "oplora/rng.hpp"
#include "oplora/spectral.hpp"
#include "oplora/toy.hpp"
