#pragma once

#include "dyncal/calibration.hpp"
#include "dyncal/errors.hpp"
#include "dyncal/fusion.hpp"
#include "dyncal/math.hpp"
#include "dyncal/metrics.hpp"
#include "dyncal/pipeline.hpp"
#include "dyncal/pseudo_labels.hpp"
#include "dyncal/rng.hpp"
#include "dyncal/simulator.hpp"
#include "dyncal/trajectory.hpp"
