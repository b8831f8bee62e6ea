#pragma once

#include "error.hpp"
#include "repr_store.hpp"
#include "similarity.hpp"
#include "spectral.hpp"
#include "intervention.hpp"
#include "stats.hpp"
#include "planner.hpp"
#include "toymodel.hpp"
#include "report.hpp"
#include "svg.hpp"
#include "commands.hpp"
