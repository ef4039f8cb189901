#pragma once

// Umbrella header.

#include <lfm/autodiff.hpp>
#include <lfm/config.hpp>
#include <lfm/data.hpp>
#include <lfm/diagnostics.hpp>
#include <lfm/experiment.hpp>
#include <lfm/metrics.hpp>
#include <lfm/models.hpp>
#include <lfm/params.hpp>
#include <lfm/reweight.hpp>
#include <lfm/search_space.hpp>
#include <lfm/tensor.hpp>
#include <lfm/trilevel.hpp>
