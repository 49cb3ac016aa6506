#pragma once

namespace oneref {

// Entry point of the oneref-kit tool. Returns 0 on success, 2 on argument
// errors, 1 on runtime errors; errors go to stderr as
// "oneref-kit: error: <message>".
int run_cli(int argc, char** argv);

}  // namespace oneref
