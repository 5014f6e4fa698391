#pragma once

#include "fscl/acc_classifier.hpp"
#include "fscl/contrastive_loss.hpp"
#include "fscl/encoder.hpp"
#include "fscl/error.hpp"
#include "fscl/feature_augment.hpp"
#include "fscl/feature_store.hpp"
#include "fscl/random.hpp"
#include "fscl/session_harness.hpp"
