#pragma once

#include "mvdiag/common.hpp"
#include "mvdiag/telemetry.hpp"
#include "mvdiag/logparse.hpp"
#include "mvdiag/iforest.hpp"
#include "mvdiag/alerts.hpp"
#include "mvdiag/dataset.hpp"
#include "mvdiag/augment.hpp"
#include "mvdiag/autograd.hpp"
#include "mvdiag/model.hpp"
#include "mvdiag/train.hpp"
#include "mvdiag/evalkit.hpp"
#include "mvdiag/diagnose.hpp"
#include "mvdiag/simgen.hpp"
#include "mvdiag/config.hpp"
#include "mvdiag/pipeline.hpp"
