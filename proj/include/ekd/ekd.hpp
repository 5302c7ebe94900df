#pragma once

// Umbrella header.

#include "ekd/checkpoint.hpp"
#include "ekd/data.hpp"
#include "ekd/errors.hpp"
#include "ekd/eval.hpp"
#include "ekd/experiment.hpp"
#include "ekd/losses.hpp"
#include "ekd/model.hpp"
#include "ekd/network.hpp"
#include "ekd/plot.hpp"
#include "ekd/serialize.hpp"
#include "ekd/train.hpp"
