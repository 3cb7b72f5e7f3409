#pragma once

#include "mcan/backbone.hpp"
#include "mcan/checkpoint.hpp"
#include "mcan/config.hpp"
#include "mcan/corpus.hpp"
#include "mcan/cues.hpp"
#include "mcan/image.hpp"
#include "mcan/image_io.hpp"
#include "mcan/loss.hpp"
#include "mcan/moea.hpp"
#include "mcan/optim.hpp"
#include "mcan/parallel.hpp"
#include "mcan/rng.hpp"
#include "mcan/tensor_io.hpp"
#include "mcan/train.hpp"
