#pragma once

// Everything except the manifest writer, which needs libcrypto.

#include "sul/csv.hpp"
#include "sul/dataset.hpp"
#include "sul/diagnostics.hpp"
#include "sul/empirical_score.hpp"
#include "sul/errors.hpp"
#include "sul/experiments.hpp"
#include "sul/geometry.hpp"
#include "sul/krr.hpp"
#include "sul/mlp.hpp"
#include "sul/numerics.hpp"
#include "sul/sampling.hpp"
#include "sul/schedule.hpp"
#include "sul/score_field.hpp"
#include "sul/svg.hpp"
#include "sul/training.hpp"
