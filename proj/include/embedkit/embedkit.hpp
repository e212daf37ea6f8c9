#pragma once

// Umbrella header for the full toolkit.

#include "embedkit/checkpoint.hpp"
#include "embedkit/datapipe.hpp"
#include "embedkit/encoder.hpp"
#include "embedkit/error.hpp"
#include "embedkit/evalkit.hpp"
#include "embedkit/io_util.hpp"
#include "embedkit/miner.hpp"
#include "embedkit/objective.hpp"
#include "embedkit/rng.hpp"
#include "embedkit/soup.hpp"
#include "embedkit/tape.hpp"
#include "embedkit/tensor.hpp"
#include "embedkit/tokenizer.hpp"
#include "embedkit/trainer.hpp"
