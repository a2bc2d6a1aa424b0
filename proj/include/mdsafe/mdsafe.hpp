#pragma once

#include "mdsafe/dataset_io.hpp"
#include "mdsafe/error.hpp"
#include "mdsafe/gaussian_bank.hpp"
#include "mdsafe/pixel_scoring.hpp"
#include "mdsafe/report.hpp"
#include "mdsafe/risk_coverage.hpp"
#include "mdsafe/safety_gate.hpp"
#include "mdsafe/synth.hpp"
