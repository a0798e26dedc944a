#pragma once

#include "autoencoder.hpp"
#include "autograd.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "evaluator.hpp"
#include "experts.hpp"
#include "lora.hpp"
#include "metrics.hpp"
#include "optim.hpp"
#include "pipeline.hpp"
#include "reasoner.hpp"
#include "rng.hpp"
#include "router.hpp"
#include "stage.hpp"
#include "taskgen.hpp"
#include "tensor.hpp"
#include "trainer.hpp"
#include "vocab.hpp"
