#pragma once

// Measurement-based feedback stabilization of discrete-time quantum systems:
// controlled Kraus families, Lyapunov weight synthesis, delayed feedback,
// quantum filters with detection errors, the photon-box instantiation and a
// deterministic Monte Carlo trajectory engine.

#include "qfeedback/common.hpp"
#include "qfeedback/config.hpp"
#include "qfeedback/controller.hpp"
#include "qfeedback/density_matrix.hpp"
#include "qfeedback/detection.hpp"
#include "qfeedback/dynamics.hpp"
#include "qfeedback/ensemble.hpp"
#include "qfeedback/io.hpp"
#include "qfeedback/kraus_family.hpp"
#include "qfeedback/lyapunov.hpp"
#include "qfeedback/photonbox.hpp"
#include "qfeedback/reports.hpp"
#include "qfeedback/rng.hpp"
