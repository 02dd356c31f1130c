#pragma once

#include "roughwave/core/error.hpp"
#include "roughwave/core/grid.hpp"
#include "roughwave/core/io.hpp"
#include "roughwave/core/rng.hpp"
#include "roughwave/lp.hpp"
#include "roughwave/metric.hpp"
#include "roughwave/symbolcalc.hpp"
#include "roughwave/spectral.hpp"
#include "roughwave/state.hpp"
#include "roughwave/microlocal.hpp"
#include "roughwave/bichar.hpp"
#include "roughwave/harness.hpp"
