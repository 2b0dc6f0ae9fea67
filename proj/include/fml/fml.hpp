#pragma once

#include "fml/error.hpp"
#include "fml/harness.hpp"
#include "fml/kinematics.hpp"
#include "fml/motion.hpp"
#include "fml/nodes.hpp"
#include "fml/relations.hpp"
#include "fml/rng.hpp"
#include "fml/scenegen.hpp"
#include "fml/spectral.hpp"
#include "fml/transform_vec.hpp"
