#pragma once

// Umbrella header.

#include "mmt/bleu.hpp"
#include "mmt/checkpoint.hpp"
#include "mmt/config.hpp"
#include "mmt/data.hpp"
#include "mmt/decoder.hpp"
#include "mmt/encoder.hpp"
#include "mmt/error.hpp"
#include "mmt/gradcheck.hpp"
#include "mmt/grounding.hpp"
#include "mmt/model.hpp"
#include "mmt/optim.hpp"
#include "mmt/rng.hpp"
#include "mmt/tensor.hpp"
#include "mmt/trainer.hpp"
#include "mmt/translate.hpp"
#include "mmt/vocab.hpp"
