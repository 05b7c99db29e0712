#pragma once

#include "shapesynth/csv.hpp"
#include "shapesynth/digest.hpp"
#include "shapesynth/error.hpp"
#include "shapesynth/evaluate.hpp"
#include "shapesynth/harmonize.hpp"
#include "shapesynth/ipf.hpp"
#include "shapesynth/manifest.hpp"
#include "shapesynth/parallel.hpp"
#include "shapesynth/pipeline.hpp"
#include "shapesynth/rng.hpp"
#include "shapesynth/synthpop.hpp"
