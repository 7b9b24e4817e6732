#pragma once

#include "deft/analysis.hpp"
#include "deft/corpus.hpp"
#include "deft/distill.hpp"
#include "deft/error.hpp"
#include "deft/filter.hpp"
#include "deft/pipeline.hpp"
#include "deft/random.hpp"
#include "deft/reward.hpp"
#include "deft/synth.hpp"
#include "deft/text_io.hpp"
#include "deft/toylm.hpp"
#include "deft/train.hpp"
