#pragma once

#include "fewvuln/errors.hpp"
#include "fewvuln/random.hpp"
#include "fewvuln/corpus.hpp"
#include "fewvuln/sampling.hpp"
#include "fewvuln/evaluation.hpp"
#include "fewvuln/structshot.hpp"
#include "fewvuln/tokenizer.hpp"
#include "fewvuln/encoder.hpp"
#include "fewvuln/tagger.hpp"
#include "fewvuln/experiment.hpp"
#include "fewvuln/harness.hpp"
