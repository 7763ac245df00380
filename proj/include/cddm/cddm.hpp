// cddm.hpp: umbrella header.

#ifndef CDDM_CDDM_HPP
#define CDDM_CDDM_HPP

#include "config.hpp"
#include "denoiser.hpp"
#include "diffusion.hpp"
#include "experiment.hpp"
#include "grid.hpp"
#include "metrics.hpp"
#include "operators.hpp"
#include "phantom.hpp"
#include "pipeline.hpp"
#include "solvers.hpp"

#endif
