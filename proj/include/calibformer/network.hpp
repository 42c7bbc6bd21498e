#pragma once

#include "calibformer/network/checkpoint.hpp"
#include "calibformer/network/config.hpp"
#include "calibformer/network/model.hpp"
