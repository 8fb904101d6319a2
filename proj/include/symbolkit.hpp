#ifndef SYMBOLKIT_HPP
#define SYMBOLKIT_HPP

#include "symbolkit/bundle.hpp"
#include "symbolkit/cluster.hpp"
#include "symbolkit/embed.hpp"
#include "symbolkit/error.hpp"
#include "symbolkit/knn.hpp"
#include "symbolkit/metrics.hpp"
#include "symbolkit/model_io.hpp"
#include "symbolkit/pipeline.hpp"
#include "symbolkit/report.hpp"
#include "symbolkit/roipool.hpp"
#include "symbolkit/symtab.hpp"
#include "symbolkit/synth.hpp"

#endif
