# lesionseg package initialization
