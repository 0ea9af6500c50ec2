#pragma once

#include "tsar/tape.hpp"

// Fault injection for exercising the gradient checker. Not for production use.
namespace tsar::testing {

// Scales the weight gradient emitted by the given op's backward by 1.5.
// Only kConv2d honours this today.
void inject_backward_fault(OpKind kind);
void clear_backward_fault();

}  // namespace tsar::testing
