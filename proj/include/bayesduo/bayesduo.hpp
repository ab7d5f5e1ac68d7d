#pragma once

#include "bayesduo/errors.hpp"
#include "bayesduo/linalg.hpp"
#include "bayesduo/random.hpp"
#include "bayesduo/embeddings_io.hpp"
#include "bayesduo/gaussian.hpp"
#include "bayesduo/laplace.hpp"
#include "bayesduo/probcosine.hpp"
#include "bayesduo/metrics.hpp"
#include "bayesduo/model.hpp"
#include "bayesduo/active.hpp"
