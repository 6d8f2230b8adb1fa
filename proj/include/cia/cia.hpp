#pragma once

#include "autodiff.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"
#include "image.hpp"
#include "model.hpp"
#include "objective.hpp"
#include "attack.hpp"
#include "corpus.hpp"
#include "eval.hpp"
#include "io.hpp"
#include "cli.hpp"
