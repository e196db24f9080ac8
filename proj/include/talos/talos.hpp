#pragma once

#include "checkpoint.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "quantile.hpp"
#include "random.hpp"
#include "sampling.hpp"
#include "simulator.hpp"
#include "trainer.hpp"
#include "verify.hpp"
