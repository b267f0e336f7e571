#pragma once

#include "common.hpp"
#include "tensorio.hpp"
#include "keyvalue.hpp"
#include "scene.hpp"
#include "raster.hpp"
#include "synth.hpp"
#include "field.hpp"
#include "preprocess.hpp"
#include "attention.hpp"
#include "losses.hpp"
#include "adam.hpp"
#include "train.hpp"
#include "query.hpp"
#include "gradcheck.hpp"
#include "workspace.hpp"
