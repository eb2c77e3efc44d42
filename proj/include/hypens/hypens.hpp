#pragma once

#include "core.hpp"
#include "metrics.hpp"
#include "transport.hpp"
#include "scorer.hpp"
#include "ensemble.hpp"
#include "genkit.hpp"
#include "backends.hpp"
#include "robustness.hpp"
#include "pipeline.hpp"
