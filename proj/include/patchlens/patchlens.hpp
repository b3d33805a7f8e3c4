#pragma once

// Umbrella header: the whole library in one include.

#include "patchlens/checkpoint.hpp"
#include "patchlens/config.hpp"
#include "patchlens/data.hpp"
#include "patchlens/debias.hpp"
#include "patchlens/errors.hpp"
#include "patchlens/experiments.hpp"
#include "patchlens/grad_check.hpp"
#include "patchlens/hooks.hpp"
#include "patchlens/kernels.hpp"
#include "patchlens/masks.hpp"
#include "patchlens/metric_spec.hpp"
#include "patchlens/metrics.hpp"
#include "patchlens/model.hpp"
#include "patchlens/optimizer.hpp"
#include "patchlens/parallel.hpp"
#include "patchlens/patching.hpp"
#include "patchlens/presets.hpp"
#include "patchlens/report.hpp"
#include "patchlens/rng.hpp"
#include "patchlens/synth.hpp"
#include "patchlens/tensor.hpp"
#include "patchlens/trainer.hpp"
#include "patchlens/version.hpp"
#include "patchlens/vocab.hpp"
