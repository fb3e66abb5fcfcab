#pragma once

#include "kdreid/adaptation.hpp"
#include "kdreid/errors.hpp"
#include "kdreid/evaluation.hpp"
#include "kdreid/experiment.hpp"
#include "kdreid/losses.hpp"
#include "kdreid/model.hpp"
#include "kdreid/mtda.hpp"
#include "kdreid/sampling.hpp"
#include "kdreid/scenario.hpp"
#include "kdreid/synth.hpp"
#include "kdreid/tape.hpp"
#include "kdreid/tensor.hpp"
