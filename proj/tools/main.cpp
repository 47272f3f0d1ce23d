#include <cstdio>

int main() {
  std::puts("pivad: cli not wired yet");
  return 0;
}
