#pragma once

#include "segqc/config.hpp"
#include "segqc/dataset.hpp"
#include "segqc/error.hpp"
#include "segqc/eval.hpp"
#include "segqc/guardrail.hpp"
#include "segqc/imaging.hpp"
#include "segqc/judge.hpp"
#include "segqc/phantom.hpp"
#include "segqc/png_io.hpp"
#include "segqc/prompt.hpp"
#include "segqc/service.hpp"
