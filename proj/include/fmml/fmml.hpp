#pragma once

#include "fmml/aggregation.hpp"
#include "fmml/common.hpp"
#include "fmml/config.hpp"
#include "fmml/data.hpp"
#include "fmml/io.hpp"
#include "fmml/nn.hpp"
#include "fmml/orchestrator.hpp"
#include "fmml/scheduler.hpp"
#include "fmml/wireless.hpp"
