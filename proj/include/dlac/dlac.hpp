#pragma once

#include "dlac/autodiff.hpp"
#include "dlac/checkpoint.hpp"
#include "dlac/encoders.hpp"
#include "dlac/explain.hpp"
#include "dlac/heads.hpp"
#include "dlac/metrics.hpp"
#include "dlac/model.hpp"
#include "dlac/optim.hpp"
#include "dlac/service.hpp"
#include "dlac/synthetic.hpp"
#include "dlac/tensor.hpp"
#include "dlac/text.hpp"
#include "dlac/training.hpp"
