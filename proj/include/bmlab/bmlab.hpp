#pragma once

// Core library. The CLI layer (commands.hpp, png.hpp) is separate because it
// pulls in libpng and nlohmann_json.

#include "bmlab/config.hpp"
#include "bmlab/errors.hpp"
#include "bmlab/eval.hpp"
#include "bmlab/heads.hpp"
#include "bmlab/imgproc.hpp"
#include "bmlab/losses.hpp"
#include "bmlab/minifpn.hpp"
#include "bmlab/model.hpp"
#include "bmlab/ops.hpp"
#include "bmlab/params.hpp"
#include "bmlab/rng.hpp"
#include "bmlab/roi_align.hpp"
#include "bmlab/synthdata.hpp"
#include "bmlab/tensor.hpp"
#include "bmlab/train.hpp"
