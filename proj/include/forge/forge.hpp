#pragma once

// Umbrella header: every public module.
#include "forge/error.hpp"
#include "forge/torus.hpp"
#include "forge/fields.hpp"
#include "forge/deformation.hpp"
#include "forge/parameters.hpp"
#include "forge/bv_builder.hpp"
#include "forge/cones.hpp"
#include "forge/shadowing.hpp"
#include "forge/foliation.hpp"
#include "forge/entropy.hpp"
#include "forge/serialize.hpp"
#include "forge/experiment_config.hpp"
#include "forge/experiment.hpp"
#include "forge/experiment_analysis.hpp"
