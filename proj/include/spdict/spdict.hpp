#ifndef SPDICT_SPDICT_HPP
#define SPDICT_SPDICT_HPP

#include "activation_store.hpp"
#include "baselines.hpp"
#include "checkpoint.hpp"
#include "common.hpp"
#include "config.hpp"
#include "evaluation.hpp"
#include "exhibits.hpp"
#include "metrics.hpp"
#include "sae.hpp"
#include "trainer.hpp"

#endif
