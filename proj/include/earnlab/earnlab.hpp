#pragma once

#include "earnlab/core.hpp"
#include "earnlab/panel.hpp"
#include "earnlab/panel_io.hpp"
#include "earnlab/nelder_mead.hpp"
#include "earnlab/estimation.hpp"
#include "earnlab/tensor.hpp"
#include "earnlab/tokenizer.hpp"
#include "earnlab/quantile.hpp"
#include "earnlab/transformer.hpp"
#include "earnlab/training.hpp"
#include "earnlab/forecaster.hpp"
#include "earnlab/conformal.hpp"
#include "earnlab/downstream.hpp"
#include "earnlab/metrics.hpp"
#include "earnlab/harness.hpp"
#include "earnlab/version.hpp"
