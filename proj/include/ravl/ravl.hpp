#pragma once

#include "ravl/cluster.hpp"
#include "ravl/core.hpp"
#include "ravl/dataset.hpp"
#include "ravl/discover.hpp"
#include "ravl/encoder.hpp"
#include "ravl/evalgen.hpp"
#include "ravl/io.hpp"
#include "ravl/mitigate.hpp"
#include "ravl/rng.hpp"
#include "ravl/suite.hpp"
#include "ravl/zeroshot.hpp"
