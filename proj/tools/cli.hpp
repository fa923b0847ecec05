#pragma once
#include <iosfwd>
namespace binaformer { int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err); }
