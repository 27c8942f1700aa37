#pragma once

#include "sketch/autodiff.hpp"
#include "sketch/data.hpp"
#include "sketch/encoder.hpp"
#include "sketch/entropy.hpp"
#include "sketch/error.hpp"
#include "sketch/evaluation.hpp"
#include "sketch/hashing.hpp"
#include "sketch/objectives.hpp"
#include "sketch/training.hpp"
#include "sketch/zero_shot.hpp"
