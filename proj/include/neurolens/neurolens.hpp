#pragma once

#include "neurolens/analysis.hpp"
#include "neurolens/attribution.hpp"
#include "neurolens/corpus.hpp"
#include "neurolens/csv.hpp"
#include "neurolens/engine.hpp"
#include "neurolens/error.hpp"
#include "neurolens/fixture.hpp"
#include "neurolens/hash.hpp"
#include "neurolens/model.hpp"
#include "neurolens/pipeline.hpp"
#include "neurolens/probe.hpp"
#include "neurolens/rng.hpp"
#include "neurolens/svg.hpp"
#include "neurolens/synthetic.hpp"
#include "neurolens/tensor.hpp"
#include "neurolens/tensor_file.hpp"
#include "neurolens/text_norm.hpp"
#include "neurolens/vocab.hpp"
