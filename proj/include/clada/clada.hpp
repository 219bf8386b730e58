#pragma once

#include "clada/activation_meter.hpp"
#include "clada/bench.hpp"
#include "clada/cogload.hpp"
#include "clada/corpus.hpp"
#include "clada/error.hpp"
#include "clada/forward.hpp"
#include "clada/model.hpp"
#include "clada/model_io.hpp"
#include "clada/panel.hpp"
#include "clada/random.hpp"
#include "clada/runtime.hpp"
#include "clada/similarity.hpp"
#include "clada/tensor.hpp"
#include "clada/threshold_search.hpp"
#include "clada/tokenizer.hpp"
