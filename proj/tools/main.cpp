#include <cstdio>

int main() {
  std::puts("cmssl: subcommands not wired up yet");
  return 0;
}
