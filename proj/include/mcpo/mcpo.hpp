#pragma once

#include "mcpo/advantage.hpp"
#include "mcpo/autodiff.hpp"
#include "mcpo/config.hpp"
#include "mcpo/consolidation.hpp"
#include "mcpo/diagnostics.hpp"
#include "mcpo/error.hpp"
#include "mcpo/objective.hpp"
#include "mcpo/optimizer.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/rng.hpp"
#include "mcpo/runs.hpp"
#include "mcpo/task_env.hpp"
#include "mcpo/trainer.hpp"
#include "mcpo/verify.hpp"
