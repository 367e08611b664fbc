// include/speechalign/logging.hpp

// Copyright 2026  The speechalign Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <functional>
#include <string>
#include <string_view>

namespace speechalign {

using WarningSink = std::function<void(std::string_view)>;

/// Emits a warning (stderr by default).
void warn(const std::string& message);

/// Replaces the warning sink; returns the previous one. An empty sink
/// restores stderr output.
WarningSink set_warning_sink(WarningSink sink);

}  // namespace speechalign
