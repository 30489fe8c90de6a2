#ifndef PXBO_PXBO_HPP
#define PXBO_PXBO_HPP

#include "acquisition.hpp"
#include "agents.hpp"
#include "bradley_terry.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "orchestrator.hpp"
#include "similarity.hpp"
#include "surrogate_gp.hpp"

#endif // PXBO_PXBO_HPP
