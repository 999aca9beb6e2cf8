#include <cstdio>

int main() {
    std::puts("melforge CLI placeholder");
    return 0;
}
