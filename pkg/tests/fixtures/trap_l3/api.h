void run_one(void);
void run_two(void);
