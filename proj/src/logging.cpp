// src/logging.cpp

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

#include "speechalign/logging.hpp"

#include <cstdio>
#include <iostream>

#include "speechalign/random.hpp"

namespace speechalign {

namespace {
WarningSink& sink() {
  static WarningSink s;
  return s;
}
}  // namespace

void warn(const std::string& message) {
  if (sink()) {
    sink()(message);
    return;
  }
  std::cerr << "WARNING (speechalign): " << message << "\n";
}

WarningSink set_warning_sink(WarningSink s) {
  WarningSink prev = std::move(sink());
  sink() = std::move(s);
  return prev;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace speechalign
