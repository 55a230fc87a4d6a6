#pragma once

#include "fedtune/error.hpp"
#include "fedtune/random.hpp"
#include "fedtune/data.hpp"
#include "fedtune/model.hpp"
#include "fedtune/hpo.hpp"
#include "fedtune/sched.hpp"
#include "fedtune/flcore.hpp"
#include "fedtune/dispatch.hpp"
#include "fedtune/experiment.hpp"
