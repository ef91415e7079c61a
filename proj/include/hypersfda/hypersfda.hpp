#pragma once

#include "hypersfda/common.hpp"
#include "hypersfda/dataset.hpp"
#include "hypersfda/hypergraph.hpp"
#include "hypersfda/model.hpp"
#include "hypersfda/nnls.hpp"
#include "hypersfda/objective.hpp"
#include "hypersfda/pca.hpp"
#include "hypersfda/serialize.hpp"
#include "hypersfda/trainer.hpp"
