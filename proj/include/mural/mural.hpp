// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "mural/config.hpp"
#include "mural/contour.hpp"
#include "mural/dataset.hpp"
#include "mural/denoiser.hpp"
#include "mural/diffusion.hpp"
#include "mural/fdp.hpp"
#include "mural/fft.hpp"
#include "mural/fusion.hpp"
#include "mural/image.hpp"
#include "mural/image_io.hpp"
#include "mural/metrics.hpp"
#include "mural/oracle.hpp"
