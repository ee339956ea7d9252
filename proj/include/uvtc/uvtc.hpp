#pragma once

#include "uvtc/error.hpp"
#include "uvtc/exposure_stage.hpp"
#include "uvtc/media_io.hpp"
#include "uvtc/metrics.hpp"
#include "uvtc/multiaxis_noise.hpp"
#include "uvtc/objectives.hpp"
#include "uvtc/parallel.hpp"
#include "uvtc/pipeline.hpp"
#include "uvtc/types.hpp"
#include "uvtc/uvt_core.hpp"
#include "uvtc/warp_mask.hpp"
